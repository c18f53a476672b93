#include "ctxvit/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace ctxvit {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::logic_error("Tensor::item on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) {
    return std::vector<double>(node_->data.size(), 0.0);
  }
  return node_->grad;
}

Tensor Tensor::clone(bool requires_grad) const {
  return from(shape(), node_->data, requires_grad);
}

void Tape::record(const Tensor& output, std::vector<detail::NodePtr> inputs, BackwardFn backward) {
  records_.push_back(Record{output.node(), std::move(inputs), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  // A loss with no path to any trainable tensor has zero gradient everywhere.
  if (!loss.requires_grad()) return;
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) {
      continue;
    }
    it->backward(it->output->grad);
  }
  for (const auto& rec : records_) {
    for (const auto& in : rec.inputs) {
      if (in->requires_grad) {
        in->grad_buffer();
      }
    }
  }
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) {
    throw std::logic_error("backward: no active tape");
  }
  tape->backward(loss);
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) {
    return false;
  }
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) {
      return true;
    }
  }
  return false;
}

bool should_record(std::span<const Tensor> inputs) {
  if (g_active_tape == nullptr) {
    return false;
  }
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) {
      return true;
    }
  }
  return false;
}

}  // namespace ctxvit
