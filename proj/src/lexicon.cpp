#include "unilex/lexicon.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>
#include <stdexcept>

namespace unilex {

Lexicon::Lexicon(std::vector<std::string> words, const std::vector<std::string>& reserved)
    : words_(std::move(words)) {
    if (words_.size() < 2) throw std::invalid_argument("lexicon: need at least 2 words");
    for (size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<int>(i)).second)
            throw std::invalid_argument("lexicon: duplicate word '" + words_[i] + "'");
    }
    reserved_.assign(words_.size(), false);
    for (const auto& r : reserved) {
        auto it = index_.find(r);
        if (it == index_.end())
            throw std::invalid_argument("lexicon: reserved token '" + r + "' not in vocabulary");
        reserved_[static_cast<size_t>(it->second)] = true;
    }
    semantic_size_ = static_cast<int>(words_.size()) -
                     static_cast<int>(std::count(reserved_.begin(), reserved_.end(), true));
}

int Lexicon::index_of(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw std::invalid_argument("lexicon: unknown word '" + w + "'");
    return it->second;
}

Vec aggregate(const TokenProjection& proj, PoolMode mode) {
    if (proj.positions() == 0)
        throw std::invalid_argument("aggregate: no positions to pool over");
    const Eigen::MatrixXd rect = proj.logits.cwiseMax(0.0);
    if (mode == PoolMode::Max) return rect.colwise().maxCoeff().transpose();
    return rect.colwise().sum().transpose();
}

Vec l2_normalize(const Vec& v) {
    if (!v.allFinite()) throw std::invalid_argument("l2_normalize: non-finite input");
    const double n = v.norm();
    if (n == 0.0) throw std::invalid_argument("l2_normalize: zero-norm vector");
    return v / n;
}

std::vector<Activation> top_activations(const Lexicon& lexicon, const Vec& v, int k) {
    if (k < 1) throw std::invalid_argument("top_activations: k must be >= 1");
    if (v.size() != lexicon.size())
        throw std::invalid_argument("top_activations: vector width != lexicon size");
    std::vector<Activation> all;
    all.reserve(static_cast<size_t>(lexicon.semantic_size()));
    for (int i = 0; i < lexicon.size(); ++i) {
        if (lexicon.is_reserved(i)) continue;
        all.push_back({i, lexicon.word(i), v(i)});
    }
    std::sort(all.begin(), all.end(), [](const Activation& a, const Activation& b) {
        if (a.value != b.value) return a.value > b.value;
        return a.dim < b.dim;
    });
    if (static_cast<size_t>(k) < all.size()) all.resize(static_cast<size_t>(k));
    return all;
}

SparsityStats sparsity_stats(const std::vector<Vec>& batch, double threshold) {
    if (batch.empty()) throw std::invalid_argument("sparsity_stats: empty batch");
    if (threshold < 0.0) throw std::invalid_argument("sparsity_stats: negative threshold");
    double active = 0.0, l1 = 0.0, l2 = 0.0;
    for (const auto& v : batch) {
        active += static_cast<double>((v.array() > threshold).count());
        l1 += v.lpNorm<1>();
        l2 += v.norm();
    }
    const double n = static_cast<double>(batch.size());
    return {active / n, l1 / n, l2 / n};
}

void write_sparse(std::ostream& os, const Lexicon& lexicon, const Vec& v) {
    if (v.size() != lexicon.size())
        throw std::invalid_argument("write_sparse: vector width != lexicon size");
    std::vector<std::pair<double, int>> entries;
    for (int i = 0; i < v.size(); ++i)
        if (v(i) != 0.0) entries.emplace_back(v(i), i);
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (const auto& [value, dim] : entries)
        os << dim << '\t' << lexicon.word(dim) << '\t' << value << '\n';
}

}  // namespace unilex
