#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "marlsim/rng.hpp"
#include "marlsim/tensor.hpp"

namespace marlsim {

using Token = int;
inline constexpr Token kEosToken = 0;

// Token-level softmax policy over a fixed vocabulary: pi(token | context) =
// softmax(W * phi(context)). phi is a bag of the last four context tokens,
// one-hot over feature buckets (token id mod feature_dim), averaged. Small
// enough to finite-difference, rich enough for non-trivial gradients.
class PolicyModel {
public:
    static constexpr std::size_t kContextWindow = 4;

    PolicyModel() = default;
    PolicyModel(std::size_t vocab_size, std::size_t feature_dim)
        : weights_(vocab_size, feature_dim) {}

    static PolicyModel seeded(std::size_t vocab_size, std::size_t feature_dim,
                              std::uint64_t seed, double scale = 0.5) {
        PolicyModel m(vocab_size, feature_dim);
        Rng rng(seed);
        for (double& w : m.weights_.a) w = scale * rng.next_normal();
        return m;
    }

    std::size_t vocab_size() const { return weights_.rows; }
    std::size_t feature_dim() const { return weights_.cols; }
    Matrix& weights() { return weights_; }
    const Matrix& weights() const { return weights_; }

    std::vector<double> featurize(std::span<const Token> context) const {
        std::vector<double> phi(feature_dim(), 0.0);
        const std::size_t n = std::min(context.size(), kContextWindow);
        if (n == 0) return phi;
        const double w = 1.0 / static_cast<double>(n);
        for (std::size_t i = context.size() - n; i < context.size(); ++i) {
            phi[static_cast<std::size_t>(context[i]) % feature_dim()] += w;
        }
        return phi;
    }

    // Softmax probabilities over the vocabulary for the given context.
    std::vector<double> probabilities(std::span<const Token> context) const {
        const std::vector<double> phi = featurize(context);
        std::vector<double> z(vocab_size(), 0.0);
        for (std::size_t v = 0; v < vocab_size(); ++v) {
            double s = 0.0;
            for (std::size_t d = 0; d < feature_dim(); ++d) s += weights_.at(v, d) * phi[d];
            z[v] = s;
        }
        const double zmax = *std::max_element(z.begin(), z.end());
        double denom = 0.0;
        for (double& x : z) {
            x = std::exp(x - zmax);
            denom += x;
        }
        for (double& x : z) x /= denom;
        return z;
    }

    double log_prob(std::span<const Token> context, Token action) const {
        const std::vector<double> p = probabilities(context);
        return std::log(p[static_cast<std::size_t>(action)]);
    }

    // Accumulates weight * d log pi(action | context) / dW into `out`.
    // The analytic form is (e_action - pi) * phi^T.
    void accumulate_grad_log_prob(std::span<const Token> context, Token action, double weight,
                                  Matrix& out) const {
        const std::vector<double> phi = featurize(context);
        const std::vector<double> p = probabilities(context);
        for (std::size_t v = 0; v < vocab_size(); ++v) {
            const double coef =
                weight * ((static_cast<Token>(v) == action ? 1.0 : 0.0) - p[v]);
            if (coef == 0.0) continue;
            for (std::size_t d = 0; d < feature_dim(); ++d) {
                out.at(v, d) += coef * phi[d];
            }
        }
    }

    Token sample_token(std::span<const Token> context, Rng& rng) const {
        const std::vector<double> p = probabilities(context);
        const double u = rng.next_unit();
        double acc = 0.0;
        for (std::size_t v = 0; v < p.size(); ++v) {
            acc += p[v];
            if (u < acc) return static_cast<Token>(v);
        }
        return static_cast<Token>(p.size() - 1);
    }

    Token greedy_token(std::span<const Token> context) const {
        const std::vector<double> p = probabilities(context);
        std::size_t best = 0;
        for (std::size_t v = 1; v < p.size(); ++v)
            if (p[v] > p[best]) best = v;  // ties keep the lowest id
        return static_cast<Token>(best);
    }

    struct Generation {
        std::vector<Token> tokens;
        std::vector<double> log_probs;
    };

    // Autoregressive rollout until EOS or max_tokens. Passing a null rng
    // selects greedy decoding.
    Generation generate(std::span<const Token> prompt, std::size_t max_tokens, Rng* rng) const {
        Generation out;
        std::vector<Token> context(prompt.begin(), prompt.end());
        while (out.tokens.size() < max_tokens) {
            const Token t = rng ? sample_token(context, *rng) : greedy_token(context);
            out.log_probs.push_back(log_prob(context, t));
            out.tokens.push_back(t);
            context.push_back(t);
            if (t == kEosToken) break;
        }
        return out;
    }

private:
    Matrix weights_;
};

}  // namespace marlsim
