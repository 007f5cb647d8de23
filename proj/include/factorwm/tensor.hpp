#pragma once

#include "factorwm/errors.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace fwm {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// When true, every op scans its output for NaN/Inf and throws NumericError.
/// Defaults to on in debug builds, off in release; tests flip it on.
bool& finite_checks();

class Tape;

/// Dense row-major float64 array. Values are immutable after construction;
/// the only sanctioned mutation is the optimizer's in-place parameter update
/// (via raw()), which happens outside any live graph use.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor from(Shape shape, std::vector<double> data);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t size() const;
    std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::int64_t rows() const;
    std::int64_t cols() const;

    const std::vector<double>& data() const { return *data_; }
    /// Mutable access to the underlying buffer (optimizer updates only).
    std::vector<double>& raw() { return *data_; }
    const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

    double value() const; // requires size() == 1
    double operator()(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    double operator()(std::int64_t i, std::int64_t j) const {
        return (*data_)[static_cast<std::size_t>(i * cols() + j)];
    }

    Tape* tape() const { return tape_; }
    int node() const { return node_; }
    bool tracked() const { return node_ >= 0; }

    /// Same buffer, detached from any tape.
    Tensor detached() const;

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

/// Append-only record of differentiable operations. Node order is creation
/// order, which is topological by construction; backward() sweeps the list
/// once in reverse and accumulates gradients into per-node buffers.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers `value` as a differentiable leaf. Re-watching the same
    /// underlying buffer returns the existing node, so a parameter used in
    /// several places accumulates one gradient.
    Tensor watch(const Tensor& value);

    /// Emits a new op node. `parents` are node ids (< the new id).
    Tensor emit(Shape shape, std::shared_ptr<std::vector<double>> data,
                std::vector<int> parents, BackwardFn backward);

    /// Runs reverse accumulation from a scalar loss.
    void backward(const Tensor& loss);

    /// Gradient buffer for `node`, allocated (zeroed) on first touch.
    std::vector<double>& grad_buffer(int node);

    /// Gradient of the last backward() wrt a tracked or watched tensor;
    /// nullptr if the tensor never entered this tape or received no gradient.
    const std::vector<double>* grad(const Tensor& t) const;

    std::size_t num_nodes() const { return nodes_.size(); }

    /// Drops all nodes and gradients; watched registrations are forgotten.
    void reset();

private:
    struct Node {
        Shape shape;
        std::vector<int> parents;
        BackwardFn backward; // empty for leaves
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::unordered_map<const void*, int> watched_;
};

/// Tape shared by all tracked inputs, or nullptr if every input is constant.
/// Mixing tensors from two different tapes is a logic error.
Tape* common_tape(std::initializer_list<const Tensor*> inputs);

void check_finite(const std::vector<double>& data, const char* op_name);

} // namespace fwm
