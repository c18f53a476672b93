#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ctxvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the reverse pass touches the node
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) {
      grad.assign(data.size(), 0.0);
    }
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Dense row-major double tensor. Copies share storage; data is treated as
// immutable once an op has consumed it, except for parameters updated by an
// optimizer between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }
  double item() const;
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; all zeros when nothing has been accumulated yet.
  std::vector<double> grad() const;
  std::span<const double> grad_view() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy with fresh storage and no gradient history.
  Tensor clone(bool requires_grad = false) const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

using BackwardFn = std::function<void(std::span<const double> out_grad)>;

// Ordered record of primitive ops. Records are appended in execution order,
// which is a topological order of the graph; the reverse pass walks it
// backwards so accumulation order is fixed.
class Tape {
 public:
  struct Record {
    detail::NodePtr output;
    std::vector<detail::NodePtr> inputs;
    BackwardFn backward;
  };

  void record(const Tensor& output, std::vector<detail::NodePtr> inputs, BackwardFn backward);
  // Accumulates d loss / d x into every recorded input; a loss that does not
  // require grad leaves all gradients untouched.
  void backward(const Tensor& loss);
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

 private:
  std::vector<Record> records_;
};

// The tape ops record into on this thread, or nullptr when recording is off.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the current thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Runs the reverse pass of `loss` on the active tape.
void backward(const Tensor& loss);

// True when an op over `inputs` must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(std::span<const Tensor> inputs);

}  // namespace ctxvit
