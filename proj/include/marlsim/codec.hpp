#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "marlsim/object_store.hpp"
#include "marlsim/policy.hpp"
#include "marlsim/tensor.hpp"

namespace marlsim {

// Payload codecs for the complex-typed experience cells.

inline HeterogeneousObject encode_tokens(const std::vector<Token>& tokens) {
    HeterogeneousObject o;
    o.dtype = DType::List;
    o.payload.reserve(tokens.size() * 8 + 8);
    append_u64(o.payload, tokens.size());
    for (Token t : tokens) append_u64(o.payload, static_cast<std::uint64_t>(t));
    return o;
}

inline std::vector<Token> decode_tokens(const HeterogeneousObject& o) {
    ByteReader r(o.payload);
    const std::uint64_t n = r.read_u64();
    std::vector<Token> out(n);
    for (std::uint64_t i = 0; i < n; ++i) out[i] = static_cast<Token>(r.read_u64());
    return out;
}

inline HeterogeneousObject encode_f64_list(const std::vector<double>& xs) {
    HeterogeneousObject o;
    o.dtype = DType::F64Tensor;
    o.shape = {xs.size()};
    o.payload.resize(xs.size() * sizeof(double));
    if (!xs.empty()) std::memcpy(o.payload.data(), xs.data(), o.payload.size());
    return o;
}

inline std::vector<double> decode_f64_list(const HeterogeneousObject& o) {
    std::vector<double> out(o.payload.size() / sizeof(double));
    if (!out.empty()) std::memcpy(out.data(), o.payload.data(), o.payload.size());
    return out;
}

}  // namespace marlsim
