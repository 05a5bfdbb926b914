#pragma once

#include <deque>
#include <utility>
#include <vector>

#include "irfusion/nn/ops.hpp"
#include "irfusion/nn/rng.hpp"
#include "irfusion/nn/tensor.hpp"

namespace irfusion::nn {

enum class OpKind { Input, Conv, BatchNorm, Activation, MaxPool, Upsample, Concat, Split };

// Static computation graph: nodes are appended once at build time and
// executed in declaration order, with backward walking the exact reverse.
// Channel counts are fixed at build time; batch and spatial dims follow the
// inputs of each forward call.
template <typename T>
class Graph {
 public:
  enum class Mode { Train, Eval };

  struct Node {
    OpKind kind = OpKind::Input;
    int in0 = -1, in1 = -1;
    int channels = 0;
    int widx = -1, bidx = -1;  // conv parameters
    int k = 1, stride = 1, pad = 0;
    int gidx = -1, beidx = -1;  // batch-norm parameters
    Tensor<T> running_mean, running_var;
    BatchNormCache<T> bn_cache;
    bool bn_has_stats = false;
    Act act = Act::Linear;
    std::vector<int> argmax;
    int factor = 2;
    int half_index = 0;
    Tensor<T> out;
    Tensor<T> grad;
  };

  std::vector<Node> nodes;
  std::deque<Parameter<T>> params;

  int add_input(int channels) {
    Node nd;
    nd.kind = OpKind::Input;
    nd.channels = channels;
    input_ids_.push_back(push(nd));
    return input_ids_.back();
  }

  int conv(int x, int out_channels, int k, int stride, int pad, bool bias) {
    Node nd;
    nd.kind = OpKind::Conv;
    nd.in0 = x;
    nd.channels = out_channels;
    nd.k = k;
    nd.stride = stride;
    nd.pad = pad;
    params.emplace_back(Tensor<T>(out_channels, nodes[x].channels, k, k));
    nd.widx = static_cast<int>(params.size()) - 1;
    if (bias) {
      params.emplace_back(Tensor<T>(1, out_channels, 1, 1));
      nd.bidx = static_cast<int>(params.size()) - 1;
    }
    return push(nd);
  }

  int batchnorm(int x) {
    Node nd;
    nd.kind = OpKind::BatchNorm;
    nd.in0 = x;
    nd.channels = nodes[x].channels;
    params.emplace_back(Tensor<T>(1, nd.channels, 1, 1));
    nd.gidx = static_cast<int>(params.size()) - 1;
    params.emplace_back(Tensor<T>(1, nd.channels, 1, 1));
    nd.beidx = static_cast<int>(params.size()) - 1;
    nd.running_mean = Tensor<T>(1, nd.channels, 1, 1);
    nd.running_var = Tensor<T>(1, nd.channels, 1, 1, T(1));
    return push(nd);
  }

  int activation(int x, Act a) {
    Node nd;
    nd.kind = OpKind::Activation;
    nd.in0 = x;
    nd.channels = nodes[x].channels;
    nd.act = a;
    return push(nd);
  }

  int maxpool(int x, int k = 2, int stride = 2) {
    Node nd;
    nd.kind = OpKind::MaxPool;
    nd.in0 = x;
    nd.channels = nodes[x].channels;
    nd.k = k;
    nd.stride = stride;
    return push(nd);
  }

  int upsample(int x, int factor = 2) {
    Node nd;
    nd.kind = OpKind::Upsample;
    nd.in0 = x;
    nd.channels = nodes[x].channels;
    nd.factor = factor;
    return push(nd);
  }

  int concat(int a, int b) {
    Node nd;
    nd.kind = OpKind::Concat;
    nd.in0 = a;
    nd.in1 = b;
    nd.channels = nodes[a].channels + nodes[b].channels;
    return push(nd);
  }

  int split_half(int x, int half_index) {
    if (nodes[x].channels % 2 != 0) {
      throw std::invalid_argument("split: channel count must be even, got " +
                                  std::to_string(nodes[x].channels));
    }
    Node nd;
    nd.kind = OpKind::Split;
    nd.in0 = x;
    nd.channels = nodes[x].channels / 2;
    nd.half_index = half_index;
    return push(nd);
  }

  int channels(int node) const { return nodes[node].channels; }

  // He-uniform conv weights, zero biases, gamma 1 / beta 0, in node order.
  void init_weights(Rng& rng) {
    for (Node& nd : nodes) {
      if (nd.kind == OpKind::Conv) {
        Tensor<T>& w = params[nd.widx].value;
        const double fan_in = static_cast<double>(w.c) * w.h * w.w;
        const double bound = std::sqrt(6.0 / fan_in);
        for (T& x : w.v) x = static_cast<T>(rng.uniform(-bound, bound));
        if (nd.bidx >= 0) params[nd.bidx].value.fill(T(0));
      } else if (nd.kind == OpKind::BatchNorm) {
        params[nd.gidx].value.fill(T(1));
        params[nd.beidx].value.fill(T(0));
        nd.running_mean.fill(T(0));
        nd.running_var.fill(T(1));
        nd.bn_has_stats = false;
      }
    }
  }

  void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }

  void forward(const std::vector<const Tensor<T>*>& inputs) {
    if (inputs.size() != input_ids_.size()) {
      throw std::invalid_argument("forward: expected " + std::to_string(input_ids_.size()) +
                                  " inputs, got " + std::to_string(inputs.size()));
    }
    for (size_t i = 0; i < inputs.size(); ++i) {
      const Tensor<T>& t = *inputs[i];
      if (t.c != nodes[input_ids_[i]].channels) {
        throw std::invalid_argument("forward: input " + std::to_string(i) + " has " +
                                    std::to_string(t.c) + " channels, graph expects " +
                                    std::to_string(nodes[input_ids_[i]].channels));
      }
      nodes[input_ids_[i]].out = t;
    }
    for (Node& nd : nodes) {
      switch (nd.kind) {
        case OpKind::Input:
          break;
        case OpKind::Conv: {
          const Tensor<T>* b = nd.bidx >= 0 ? &params[nd.bidx].value : nullptr;
          nd.out = conv2d_forward(nodes[nd.in0].out, params[nd.widx].value, b, nd.stride, nd.pad);
          break;
        }
        case OpKind::BatchNorm: {
          if (mode_ == Mode::Train) {
            nd.out = batchnorm_forward_train(nodes[nd.in0].out, params[nd.gidx].value,
                                             params[nd.beidx].value, T(1e-5), T(0.9),
                                             nd.running_mean, nd.running_var, nd.bn_cache);
            nd.bn_has_stats = true;
          } else {
            if (!nd.bn_has_stats) {
              throw std::runtime_error(
                  "batchnorm eval requires trained or loaded running statistics");
            }
            nd.out = batchnorm_forward_eval(nodes[nd.in0].out, params[nd.gidx].value,
                                            params[nd.beidx].value, T(1e-5), nd.running_mean,
                                            nd.running_var);
          }
          break;
        }
        case OpKind::Activation:
          nd.out = act_forward(nodes[nd.in0].out, nd.act);
          break;
        case OpKind::MaxPool:
          nd.out = maxpool_forward(nodes[nd.in0].out, nd.k, nd.stride, &nd.argmax);
          break;
        case OpKind::Upsample:
          nd.out = upsample_forward(nodes[nd.in0].out, nd.factor);
          break;
        case OpKind::Concat:
          nd.out = concat_channels(nodes[nd.in0].out, nodes[nd.in1].out);
          break;
        case OpKind::Split:
          nd.out = split_channels(nodes[nd.in0].out, nd.half_index);
          break;
      }
    }
    has_forward_ = true;
  }

  const Tensor<T>& output(int node) const { return nodes[node].out; }

  // Seeds are (node id, d loss / d node output); parameter gradients
  // accumulate until zero_grad().
  void backward(const std::vector<std::pair<int, const Tensor<T>*>>& seeds) {
    if (!has_forward_) throw std::logic_error("backward called before forward");
    if (mode_ != Mode::Train) throw std::logic_error("backward requires train mode");
    for (Node& nd : nodes) {
      nd.grad = Tensor<T>(nd.out.n, nd.out.c, nd.out.h, nd.out.w);
    }
    for (const auto& [id, g] : seeds) {
      if (!nodes[id].out.same_shape(*g)) {
        throw std::invalid_argument("backward: seed shape " + g->shape_str() +
                                    " does not match node output " + nodes[id].out.shape_str());
      }
      for (size_t i = 0; i < g->size(); ++i) nodes[id].grad.v[i] += g->v[i];
    }
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
      Node& nd = *it;
      switch (nd.kind) {
        case OpKind::Input:
          break;
        case OpKind::Conv: {
          Tensor<T>* gb = nd.bidx >= 0 ? &params[nd.bidx].grad : nullptr;
          conv2d_backward(nodes[nd.in0].out, params[nd.widx].value, nd.grad, nd.stride, nd.pad,
                          nodes[nd.in0].grad, params[nd.widx].grad, gb);
          break;
        }
        case OpKind::BatchNorm:
          batchnorm_backward(params[nd.gidx].value, nd.grad, nd.bn_cache, nodes[nd.in0].grad,
                             params[nd.gidx].grad, params[nd.beidx].grad);
          break;
        case OpKind::Activation:
          act_backward(nodes[nd.in0].out, nd.grad, nd.act, nodes[nd.in0].grad);
          break;
        case OpKind::MaxPool:
          maxpool_backward(nd.grad, nd.argmax, nodes[nd.in0].grad);
          break;
        case OpKind::Upsample:
          upsample_backward(nd.grad, nd.factor, nodes[nd.in0].grad);
          break;
        case OpKind::Concat:
          concat_backward(nd.grad, nodes[nd.in0].channels, nodes[nd.in0].grad,
                          nodes[nd.in1].grad);
          break;
        case OpKind::Split:
          split_backward(nd.grad, nd.half_index, nodes[nd.in0].grad);
          break;
      }
    }
  }

  void zero_grad() {
    for (Parameter<T>& p : params) p.zero_grad();
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    out.reserve(params.size());
    for (Parameter<T>& p : params) out.push_back(&p);
    return out;
  }

  size_t parameter_count() const {
    size_t total = 0;
    for (const Parameter<T>& p : params) total += p.value.size();
    return total;
  }

  const std::vector<int>& input_ids() const { return input_ids_; }

 private:
  int push(Node nd) {
    nodes.push_back(std::move(nd));
    return static_cast<int>(nodes.size()) - 1;
  }

  std::vector<int> input_ids_;
  Mode mode_ = Mode::Train;
  bool has_forward_ = false;
};

}  // namespace irfusion::nn
