#pragma once

#include <Eigen/Core>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

namespace unilex {

using Vec = Eigen::VectorXd;

/// The ordered word vocabulary that defines the lexicon space: one dimension
/// per word. Reserved control tokens (pad/cls/mask) occupy dimensions too --
/// MLM targets need them -- but are flagged non-semantic and excluded from
/// activation reports.
class Lexicon {
public:
    Lexicon(std::vector<std::string> words, const std::vector<std::string>& reserved);

    int size() const { return static_cast<int>(words_.size()); }
    int semantic_size() const { return semantic_size_; }
    const std::vector<std::string>& words() const { return words_; }
    const std::string& word(int dim) const { return words_.at(static_cast<size_t>(dim)); }
    int index_of(const std::string& w) const;
    bool contains(const std::string& w) const { return index_.count(w) > 0; }
    bool is_reserved(int dim) const { return reserved_.at(static_cast<size_t>(dim)); }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    std::vector<bool> reserved_;
    int semantic_size_ = 0;
};

/// Per-position lexicon logits produced by the shared projection head:
/// one row per encoder output position, one column per lexicon word.
struct TokenProjection {
    Eigen::MatrixXd logits;

    Eigen::Index positions() const { return logits.rows(); }
    Eigen::Index width() const { return logits.cols(); }
};

enum class PoolMode { Max, Sum };

/// ReLU followed by position pooling: the nonnegative vocabulary-space
/// representation of one video or text.
Vec aggregate(const TokenProjection& proj, PoolMode mode = PoolMode::Max);

/// Scales to unit L2 norm. Rejects all-zero input: a zero-norm lexicon or
/// latent vector means the representation is dead, which should surface
/// rather than silently normalize to garbage.
Vec l2_normalize(const Vec& v);

struct Activation {
    int dim;
    std::string word;
    double value;
};

/// Top-k activated semantic dimensions, value-descending, ties broken by
/// ascending dimension index. Reserved tokens are excluded. Asking for more
/// than the semantic dimension count returns all of them.
std::vector<Activation> top_activations(const Lexicon& lexicon, const Vec& v, int k);

struct SparsityStats {
    double mean_active_dims;
    double mean_l1;
    double mean_l2;
};

/// Batch-mean count of entries above `threshold`, plus mean L1/L2 norms.
SparsityStats sparsity_stats(const std::vector<Vec>& batch, double threshold);

/// Writes nonzero dimensions as `dim<TAB>word<TAB>value`, value-descending.
void write_sparse(std::ostream& os, const Lexicon& lexicon, const Vec& v);

}  // namespace unilex
