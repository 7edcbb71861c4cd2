#pragma once

#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unilex/param.hpp"

namespace unilex {

enum class Pool { Max, Sum };
enum class Reduction { Sum, Mean };

/// Reverse-mode autodiff over Eigen double matrices (Wengert list).
/// Nodes are append-only and reference earlier nodes, so reverse creation
/// order is a valid topological order for the backward sweep.
///
/// Scalars are represented as 1x1 matrices. A tape is built per training
/// step and discarded; parameters live outside and receive accumulated
/// gradients after backward().
class Tape {
public:
    int leaf(Mat value, bool requires_grad = false);

    /// Binds an external parameter as a leaf. Repeated calls for the same
    /// parameter return the same node, so gradients from every use site
    /// accumulate in one place. Frozen parameters get requires_grad=false and
    /// never receive gradients.
    int param(Parameter& p, bool trainable = true);

    // --- elementwise / linear algebra ---
    int matmul(int a, int b);                 // A * B
    int matmul_nt(int a, int b);              // A * B^T
    int transpose(int a);
    int add(int a, int b);
    int sub(int a, int b);
    int add_rowvec(int a, int b);             // (n x d) + broadcast (1 x d)
    int scale(int a, double s);
    int hadamard(int a, int b);
    int relu(int a);
    int gelu(int a);                          // exact erf form

    // --- structured ops ---
    int layer_norm(int x, int gain, int bias, double eps = 1e-5);
    int embedding(int table, std::vector<int> ids);
    int gather_rows(int a, std::vector<int> rows);
    /// Row-normalizes with a 1e-12 norm floor so degenerate all-zero rows do
    /// not produce NaNs mid-training. The public lexicon op rejects zero
    /// vectors instead; see lexicon.hpp.
    int l2_normalize_rows(int a);
    /// Pools input rows [first,last) of each segment into one output row.
    int segment_pool(int a, std::vector<std::pair<int, int>> segments, Pool mode);
    /// Multi-head scaled dot-product attention over a stacked (batch*seq) x d
    /// input. Keys at positions >= valid_lens[b] are masked out; pass an
    /// empty vector when every position is valid.
    int attention(int q, int k, int v, int heads, int batch, int seq,
                  std::vector<int> valid_lens = {});
    int detach(int a);

    // --- reductions / losses ---
    int sum_all(int a);                       // -> 1x1
    /// red_i( -log softmax(logits_i / tau)[targets_i] )
    int softmax_xent(int logits, std::vector<int> targets, double tau, Reduction red);
    /// mean over rows of KL( softmax(student_i/tau) || softmax(teacher_i/tau) )
    int kl_softmax_rows(int student, int teacher, double tau);
    /// sum_k ( column-mean_k )^2  -> 1x1
    int col_mean_sq_sum(int a);

    void backward(int root);

    const Mat& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    /// Gradient of the last backward() root w.r.t. node `id` (zeros if the
    /// node did not influence the root).
    Mat grad(int id) const;
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    int size() const { return static_cast<int>(nodes_.size()); }

private:
    struct Node {
        Mat value;
        Mat grad;  // allocated lazily during backward
        bool requires_grad = false;
        std::function<void(Tape&)> back;
    };

    int push(Mat value, bool requires_grad, std::function<void(Tape&)> back);
    Mat& grad_ref(int id);
    bool grad_live(int id) const;

    std::vector<Node> nodes_;
    std::vector<std::pair<int, Parameter*>> bindings_;
    std::unordered_map<const Parameter*, int> param_nodes_;
};

}  // namespace unilex
