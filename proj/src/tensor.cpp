#include "factorwm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace fwm {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d < 0) {
            throw ShapeError("negative extent in shape " + shape_str(shape));
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool& finite_checks() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

void check_finite(const std::vector<double>& data, const char* op_name) {
    if (!finite_checks()) return;
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by ") + op_name);
        }
    }
}

Tensor Tensor::zeros(Shape shape) {
    return full(std::move(shape), 0.0);
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t;
    std::int64_t n = numel(shape);
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), value);
    return t;
}

Tensor Tensor::scalar(double value) {
    return full(Shape{}, value);
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(data));
    return t;
}

std::int64_t Tensor::size() const {
    return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
}

std::int64_t Tensor::rows() const {
    if (ndim() != 2) throw ShapeError("rows() on non-matrix of shape " + shape_str(shape_));
    return shape_[0];
}

std::int64_t Tensor::cols() const {
    if (ndim() != 2) throw ShapeError("cols() on non-matrix of shape " + shape_str(shape_));
    return shape_[1];
}

double Tensor::value() const {
    if (size() != 1) {
        throw ShapeError("value() on tensor of shape " + shape_str(shape_));
    }
    return (*data_)[0];
}

Tensor Tensor::detached() const {
    Tensor t(*this);
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
}

Tensor Tape::watch(const Tensor& value) {
    if (!value.defined()) {
        throw ShapeError("watch() on undefined tensor");
    }
    if (value.tracked()) {
        if (value.tape() != this) {
            throw Error("watch() on a tensor tracked by a different tape");
        }
        return value;
    }
    const void* key = value.data_.get();
    auto it = watched_.find(key);
    int node;
    if (it != watched_.end()) {
        node = it->second;
    } else {
        node = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{value.shape(), {}, {}});
        watched_.emplace(key, node);
    }
    Tensor bound(value);
    bound.tape_ = this;
    bound.node_ = node;
    return bound;
}

Tensor Tape::emit(Shape shape, std::shared_ptr<std::vector<double>> data,
                  std::vector<int> parents, BackwardFn backward) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t.shape_, std::move(parents), std::move(backward)});
    return t;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.tracked() || loss.tape() != this) {
        throw Error("backward() target is not tracked by this tape");
    }
    if (loss.size() != 1) {
        throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.node())] = {1.0};
    for (int i = loss.node(); i >= 0; --i) {
        auto& g = grads_[static_cast<std::size_t>(i)];
        if (g.empty()) continue;
        const Node& node = nodes_[static_cast<std::size_t>(i)];
        if (node.backward) {
            node.backward(*this, g);
        }
    }
}

std::vector<double>& Tape::grad_buffer(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) {
        g.assign(static_cast<std::size_t>(numel(nodes_[static_cast<std::size_t>(node)].shape)), 0.0);
    }
    return g;
}

const std::vector<double>* Tape::grad(const Tensor& t) const {
    int node = -1;
    if (t.tracked() && t.tape() == this) {
        node = t.node();
    } else {
        auto it = watched_.find(t.data_.get());
        if (it != watched_.end()) node = it->second;
    }
    if (node < 0 || static_cast<std::size_t>(node) >= grads_.size()) return nullptr;
    const auto& g = grads_[static_cast<std::size_t>(node)];
    return g.empty() ? nullptr : &g;
}

void Tape::reset() {
    nodes_.clear();
    grads_.clear();
    watched_.clear();
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (t->tracked()) {
            if (tape && tape != t->tape()) {
                throw Error("operands belong to different tapes");
            }
            tape = t->tape();
        }
    }
    return tape;
}

} // namespace fwm
