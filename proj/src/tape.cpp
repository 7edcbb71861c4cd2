#include "unilex/tape.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace unilex {

namespace {

constexpr double kMaskScore = -1e30;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("tape: " + msg);
}

/// Numerically stable in-place row softmax.
void softmax_rows(Mat& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double mx = m.row(i).maxCoeff();
        m.row(i) = (m.row(i).array() - mx).exp();
        m.row(i) /= m.row(i).sum();
    }
}

}  // namespace

int Tape::push(Mat value, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Mat& Tape::grad_ref(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

bool Tape::grad_live(int id) const {
    return nodes_[static_cast<size_t>(id)].grad.size() != 0;
}

Mat Tape::grad(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

int Tape::leaf(Mat value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

int Tape::param(Parameter& p, bool trainable) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    const int id = push(p.value, trainable, nullptr);
    if (trainable) bindings_.emplace_back(id, &p);
    param_nodes_.emplace(&p, id);
    return id;
}

int Tape::matmul(int a, int b) {
    check(value(a).cols() == value(b).rows(), "matmul inner dimension mismatch");
    const bool rg = requires_grad(a) || requires_grad(b);
    const int id = push(value(a) * value(b), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.requires_grad(a)) t.grad_ref(a).noalias() += G * t.value(b).transpose();
            if (t.requires_grad(b)) t.grad_ref(b).noalias() += t.value(a).transpose() * G;
        };
    }
    return id;
}

int Tape::matmul_nt(int a, int b) {
    check(value(a).cols() == value(b).cols(), "matmul_nt width mismatch");
    const bool rg = requires_grad(a) || requires_grad(b);
    const int id = push(value(a) * value(b).transpose(), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.requires_grad(a)) t.grad_ref(a).noalias() += G * t.value(b);
            if (t.requires_grad(b)) t.grad_ref(b).noalias() += G.transpose() * t.value(a);
        };
    }
    return id;
}

int Tape::transpose(int a) {
    const bool rg = requires_grad(a);
    const int id = push(value(a).transpose(), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            t.grad_ref(a) += t.nodes_[static_cast<size_t>(id)].grad.transpose();
        };
    }
    return id;
}

int Tape::add(int a, int b) {
    check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
          "add shape mismatch");
    const bool rg = requires_grad(a) || requires_grad(b);
    const int id = push(value(a) + value(b), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.requires_grad(a)) t.grad_ref(a) += G;
            if (t.requires_grad(b)) t.grad_ref(b) += G;
        };
    }
    return id;
}

int Tape::sub(int a, int b) {
    check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
          "sub shape mismatch");
    const bool rg = requires_grad(a) || requires_grad(b);
    const int id = push(value(a) - value(b), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.requires_grad(a)) t.grad_ref(a) += G;
            if (t.requires_grad(b)) t.grad_ref(b) -= G;
        };
    }
    return id;
}

int Tape::add_rowvec(int a, int b) {
    check(value(b).rows() == 1 && value(a).cols() == value(b).cols(),
          "add_rowvec expects a 1 x d bias matching input width");
    const bool rg = requires_grad(a) || requires_grad(b);
    Mat out = value(a);
    out.rowwise() += value(b).row(0);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.requires_grad(a)) t.grad_ref(a) += G;
            if (t.requires_grad(b)) t.grad_ref(b).row(0) += G.colwise().sum();
        };
    }
    return id;
}

int Tape::scale(int a, double s) {
    const bool rg = requires_grad(a);
    const int id = push(value(a) * s, rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, s](Tape& t) {
            t.grad_ref(a) += t.nodes_[static_cast<size_t>(id)].grad * s;
        };
    }
    return id;
}

int Tape::hadamard(int a, int b) {
    check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
          "hadamard shape mismatch");
    const bool rg = requires_grad(a) || requires_grad(b);
    const int id = push(value(a).cwiseProduct(value(b)), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, b](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.requires_grad(a)) t.grad_ref(a) += G.cwiseProduct(t.value(b));
            if (t.requires_grad(b)) t.grad_ref(b) += G.cwiseProduct(t.value(a));
        };
    }
    return id;
}

int Tape::relu(int a) {
    const bool rg = requires_grad(a);
    const int id = push(value(a).cwiseMax(0.0), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            const Mat mask = (t.value(a).array() > 0.0).cast<double>();
            t.grad_ref(a) += G.cwiseProduct(mask);
        };
    }
    return id;
}

int Tape::gelu(int a) {
    Mat out = value(a).unaryExpr(
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
    const bool rg = requires_grad(a);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            const Mat d = t.value(a).unaryExpr([](double x) {
                return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                       x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
            });
            t.grad_ref(a) += G.cwiseProduct(d);
        };
    }
    return id;
}

int Tape::layer_norm(int x, int gain, int bias, double eps) {
    const Mat& X = value(x);
    check(value(gain).rows() == 1 && value(gain).cols() == X.cols(), "layer_norm gain shape");
    check(value(bias).rows() == 1 && value(bias).cols() == X.cols(), "layer_norm bias shape");

    const Eigen::Index n = X.rows(), d = X.cols();
    auto xhat = std::make_shared<Mat>(n, d);
    auto sigma = std::make_shared<Vec>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = X.row(i).mean();
        const double var = (X.row(i).array() - mu).square().mean();
        (*sigma)(i) = std::sqrt(var + eps);
        xhat->row(i) = (X.row(i).array() - mu) / (*sigma)(i);
    }
    Mat out = *xhat;
    out.array().rowwise() *= value(gain).row(0).array();
    out.rowwise() += value(bias).row(0);

    const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, x, gain, bias, xhat, sigma](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            if (t.requires_grad(bias)) t.grad_ref(bias).row(0) += G.colwise().sum();
            if (t.requires_grad(gain))
                t.grad_ref(gain).row(0) += G.cwiseProduct(*xhat).colwise().sum();
            if (t.requires_grad(x)) {
                Mat gh = G;
                gh.array().rowwise() *= t.value(gain).row(0).array();
                Mat& dX = t.grad_ref(x);
                for (Eigen::Index i = 0; i < G.rows(); ++i) {
                    const double m1 = gh.row(i).mean();
                    const double m2 = gh.row(i).cwiseProduct(xhat->row(i)).mean();
                    dX.row(i) +=
                        ((gh.row(i).array() - m1) - xhat->row(i).array() * m2).matrix() /
                        (*sigma)(i);
                }
            }
        };
    }
    return id;
}

int Tape::embedding(int table, std::vector<int> ids) {
    const Mat& T = value(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), T.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        check(ids[i] >= 0 && ids[i] < T.rows(), "embedding id out of range");
        out.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
    }
    const bool rg = requires_grad(table);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        auto idx = std::make_shared<std::vector<int>>(std::move(ids));
        nodes_[static_cast<size_t>(id)].back = [id, table, idx](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            Mat& dT = t.grad_ref(table);
            for (size_t i = 0; i < idx->size(); ++i)
                dT.row((*idx)[i]) += G.row(static_cast<Eigen::Index>(i));
        };
    }
    return id;
}

int Tape::gather_rows(int a, std::vector<int> rows) {
    const Mat& A = value(a);
    Mat out(static_cast<Eigen::Index>(rows.size()), A.cols());
    for (size_t i = 0; i < rows.size(); ++i) {
        check(rows[i] >= 0 && rows[i] < A.rows(), "gather_rows index out of range");
        out.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
    }
    const bool rg = requires_grad(a);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        auto idx = std::make_shared<std::vector<int>>(std::move(rows));
        nodes_[static_cast<size_t>(id)].back = [id, a, idx](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            Mat& dA = t.grad_ref(a);
            for (size_t i = 0; i < idx->size(); ++i)
                dA.row((*idx)[i]) += G.row(static_cast<Eigen::Index>(i));
        };
    }
    return id;
}

int Tape::l2_normalize_rows(int a) {
    const Mat& A = value(a);
    auto norms = std::make_shared<Vec>(A.rows());
    Mat out(A.rows(), A.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        (*norms)(i) = std::max(A.row(i).norm(), 1e-12);
        out.row(i) = A.row(i) / (*norms)(i);
    }
    const bool rg = requires_grad(a);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, norms](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            const Mat& Y = t.value(id);
            Mat& dA = t.grad_ref(a);
            for (Eigen::Index i = 0; i < G.rows(); ++i) {
                const double gy = G.row(i).dot(Y.row(i));
                dA.row(i) += (G.row(i) - gy * Y.row(i)) / (*norms)(i);
            }
        };
    }
    return id;
}

int Tape::segment_pool(int a, std::vector<std::pair<int, int>> segments, Pool mode) {
    const Mat& A = value(a);
    const Eigen::Index b = static_cast<Eigen::Index>(segments.size());
    const Eigen::Index d = A.cols();
    check(b > 0, "segment_pool: empty segment list");
    Mat out(b, d);
    auto argmax = std::make_shared<Eigen::MatrixXi>();
    if (mode == Pool::Max) argmax->resize(b, d);
    for (Eigen::Index i = 0; i < b; ++i) {
        const auto [first, last] = segments[static_cast<size_t>(i)];
        check(first >= 0 && last <= A.rows() && first < last,
              "segment_pool: empty or out-of-range segment");
        if (mode == Pool::Sum) {
            out.row(i) = A.middleRows(first, last - first).colwise().sum();
        } else {
            for (Eigen::Index c = 0; c < d; ++c) {
                Eigen::Index best = first;
                for (Eigen::Index r = first + 1; r < last; ++r)
                    if (A(r, c) > A(best, c)) best = r;
                out(i, c) = A(best, c);
                (*argmax)(i, c) = static_cast<int>(best);
            }
        }
    }
    const bool rg = requires_grad(a);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        auto segs = std::make_shared<std::vector<std::pair<int, int>>>(std::move(segments));
        nodes_[static_cast<size_t>(id)].back = [id, a, segs, argmax, mode](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            Mat& dA = t.grad_ref(a);
            for (Eigen::Index i = 0; i < G.rows(); ++i) {
                const auto [first, last] = (*segs)[static_cast<size_t>(i)];
                if (mode == Pool::Sum) {
                    dA.middleRows(first, last - first).rowwise() += G.row(i);
                } else {
                    for (Eigen::Index c = 0; c < G.cols(); ++c)
                        dA((*argmax)(i, c), c) += G(i, c);
                }
            }
        };
    }
    return id;
}

int Tape::attention(int q, int k, int v, int heads, int batch, int seq,
                    std::vector<int> valid_lens) {
    const Mat& Q = value(q);
    const Mat& K = value(k);
    const Mat& V = value(v);
    const Eigen::Index d = Q.cols();
    check(Q.rows() == K.rows() && K.rows() == V.rows() && Q.cols() == K.cols() &&
              K.cols() == V.cols(),
          "attention: q/k/v shape mismatch");
    check(Q.rows() == static_cast<Eigen::Index>(batch) * seq, "attention: rows != batch*seq");
    check(d % heads == 0, "attention: width not divisible by head count");
    check(valid_lens.empty() || valid_lens.size() == static_cast<size_t>(batch),
          "attention: valid_lens size");

    const Eigen::Index dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<Mat>>();
    probs->reserve(static_cast<size_t>(batch) * heads);

    Mat out(Q.rows(), d);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
        const int len = valid_lens.empty() ? seq : valid_lens[static_cast<size_t>(b)];
        for (int h = 0; h < heads; ++h) {
            const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
            Mat scores = Q.block(r0, c0, seq, dh) * K.block(r0, c0, seq, dh).transpose() *
                         inv_sqrt_dh;
            if (len < seq) scores.rightCols(seq - len).setConstant(kMaskScore);
            softmax_rows(scores);
            out.block(r0, c0, seq, dh).noalias() = scores * V.block(r0, c0, seq, dh);
            probs->push_back(std::move(scores));
        }
    }

    const bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, q, k, v, heads, batch, seq, dh,
                                                inv_sqrt_dh, probs](Tape& t) {
            const Mat& G = t.nodes_[static_cast<size_t>(id)].grad;
            Mat& dQ = t.grad_ref(q);
            Mat& dK = t.grad_ref(k);
            Mat& dV = t.grad_ref(v);
            for (int b = 0; b < batch; ++b) {
                const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
                for (int h = 0; h < heads; ++h) {
                    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
                    const Mat& P = (*probs)[static_cast<size_t>(b) * heads + h];
                    const auto Gbh = G.block(r0, c0, seq, dh);
                    const auto Qbh = t.value(q).block(r0, c0, seq, dh);
                    const auto Kbh = t.value(k).block(r0, c0, seq, dh);
                    const auto Vbh = t.value(v).block(r0, c0, seq, dh);
                    dV.block(r0, c0, seq, dh).noalias() += P.transpose() * Gbh;
                    Mat dP = Gbh * Vbh.transpose();
                    const Vec row_dot = dP.cwiseProduct(P).rowwise().sum();
                    Mat dS = P.cwiseProduct(dP.colwise() - row_dot) * inv_sqrt_dh;
                    dQ.block(r0, c0, seq, dh).noalias() += dS * Kbh;
                    dK.block(r0, c0, seq, dh).noalias() += dS.transpose() * Qbh;
                }
            }
        };
    }
    return id;
}

int Tape::detach(int a) {
    return push(value(a), false, nullptr);
}

int Tape::sum_all(int a) {
    const bool rg = requires_grad(a);
    Mat out(1, 1);
    out(0, 0) = value(a).sum();
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a](Tape& t) {
            const double g = t.nodes_[static_cast<size_t>(id)].grad(0, 0);
            t.grad_ref(a).array() += g;
        };
    }
    return id;
}

int Tape::softmax_xent(int logits, std::vector<int> targets, double tau, Reduction red) {
    const Mat& X = value(logits);
    check(tau > 0.0, "softmax_xent: temperature must be positive");
    check(static_cast<Eigen::Index>(targets.size()) == X.rows(),
          "softmax_xent: one target per row required");
    for (const int tgt : targets)
        check(tgt >= 0 && tgt < X.cols(), "softmax_xent: target id out of range");

    auto P = std::make_shared<Mat>(X / tau);
    double total = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double mx = P->row(i).maxCoeff();
        const double lse = mx + std::log((P->row(i).array() - mx).exp().sum());
        total += lse - (*P)(i, targets[static_cast<size_t>(i)]);
    }
    softmax_rows(*P);
    const double w = red == Reduction::Mean ? 1.0 / static_cast<double>(X.rows()) : 1.0;
    Mat out(1, 1);
    out(0, 0) = total * w;

    const bool rg = requires_grad(logits);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
        nodes_[static_cast<size_t>(id)].back = [id, logits, tgt, tau, w, P](Tape& t) {
            const double g = t.nodes_[static_cast<size_t>(id)].grad(0, 0);
            Mat& dX = t.grad_ref(logits);
            const double c = g * w / tau;
            dX += c * (*P);
            for (Eigen::Index i = 0; i < dX.rows(); ++i)
                dX(i, (*tgt)[static_cast<size_t>(i)]) -= c;
        };
    }
    return id;
}

int Tape::kl_softmax_rows(int student, int teacher, double tau) {
    const Mat& S = value(student);
    const Mat& T = value(teacher);
    check(tau > 0.0, "kl_softmax_rows: temperature must be positive");
    check(S.rows() == T.rows() && S.cols() == T.cols(), "kl_softmax_rows: shape mismatch");

    auto Ps = std::make_shared<Mat>(S / tau);
    auto Pt = std::make_shared<Mat>(T / tau);
    softmax_rows(*Ps);
    softmax_rows(*Pt);
    // A = log Ps - log Pt, computed from the probabilities (strictly positive).
    auto A = std::make_shared<Mat>((Ps->array().log() - Pt->array().log()).matrix());
    const double n = static_cast<double>(S.rows());
    Mat out(1, 1);
    out(0, 0) = Ps->cwiseProduct(*A).sum() / n;

    const bool rg = requires_grad(student) || requires_grad(teacher);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, student, teacher, tau, n, Ps, Pt,
                                                A](Tape& t) {
            const double g = t.nodes_[static_cast<size_t>(id)].grad(0, 0);
            const double c = g / (n * tau);
            if (t.requires_grad(student)) {
                const Vec row_dot = Ps->cwiseProduct(*A).rowwise().sum();
                t.grad_ref(student) += c * Ps->cwiseProduct(A->colwise() - row_dot);
            }
            if (t.requires_grad(teacher)) t.grad_ref(teacher) += c * (*Pt - *Ps);
        };
    }
    return id;
}

int Tape::col_mean_sq_sum(int a) {
    const Mat& A = value(a);
    const double b = static_cast<double>(A.rows());
    auto means = std::make_shared<Eigen::RowVectorXd>(A.colwise().mean());
    Mat out(1, 1);
    out(0, 0) = means->squaredNorm();
    const bool rg = requires_grad(a);
    const int id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_[static_cast<size_t>(id)].back = [id, a, b, means](Tape& t) {
            const double g = t.nodes_[static_cast<size_t>(id)].grad(0, 0);
            t.grad_ref(a).rowwise() += (2.0 * g / b) * (*means);
        };
    }
    return id;
}

void Tape::backward(int root) {
    check(root >= 0 && root < size(), "backward: bad root id");
    check(value(root).rows() == 1 && value(root).cols() == 1, "backward: root must be scalar");
    check(requires_grad(root), "backward: root does not require grad");
    grad_ref(root)(0, 0) += 1.0;
    for (int i = root; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.requires_grad && n.back && grad_live(i)) n.back(*this);
    }
    for (const auto& [node, p] : bindings_) {
        if (grad_live(node)) p->grad += nodes_[static_cast<size_t>(node)].grad;
    }
}

}  // namespace unilex
