// Parameter registry shared by the models, init helpers, attention blocks.
#pragma once

#include "sagiri/checkpoint.hpp"
#include "sagiri/graph.hpp"

namespace sagiri {

struct ParamStore {
    std::map<std::string, Var> params;

    Var add(const std::string& name, Tensor t, bool trainable = true) {
        if (params.count(name)) throw std::logic_error("duplicate parameter: " + name);
        Var v(std::move(t), trainable);
        params.emplace(name, v);
        return v;
    }
    Var get(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw std::out_of_range("missing parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params.count(name) > 0; }

    std::vector<std::pair<std::string, Var>> trainable() const {
        std::vector<std::pair<std::string, Var>> out;
        for (auto& [k, v] : params)
            if (v.requires_grad()) out.push_back({k, v});
        return out;
    }
    int64_t count(bool trainable_only = false) const {
        int64_t n = 0;
        for (auto& [k, v] : params)
            if (!trainable_only || v.requires_grad()) n += v.val().numel();
        return n;
    }
    void export_to(ModelBundle& b) const {
        for (auto& [k, v] : params) b.tensors[k] = v.val();
    }
    void import_from(const ModelBundle& b) {
        for (auto& [k, v] : params) {
            auto it = b.tensors.find(k);
            if (it == b.tensors.end()) throw std::runtime_error("checkpoint missing tensor: " + k);
            if (it->second.shape != v.val().shape)
                throw std::runtime_error("checkpoint shape mismatch for: " + k);
            v.val() = it->second;
        }
    }
};

namespace init {

inline Tensor xavier(const std::vector<int>& shape, int fan_in, int fan_out, Rng& rng,
                     float gain = 1.0f) {
    Tensor t(shape);
    float limit = gain * std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
    rng.fill_uniform(t, -limit, limit);
    return t;
}

inline Tensor conv_weight(int oc, int ic, int k, Rng& rng, float gain = 1.0f) {
    return xavier({oc, ic, k, k}, ic * k * k, oc * k * k, rng, gain);
}

inline Tensor linear_weight(int out, int in, Rng& rng, float gain = 1.0f) {
    return xavier({out, in}, in, out, rng, gain);
}

}  // namespace init

// Multi-head self-attention over token windows [B,T,D].
struct AttentionParams {
    Var qw, qb, kw, kb, vw, vb, pw, pb;
    int heads = 1;

    static AttentionParams create(ParamStore& ps, const std::string& prefix, int dim, int heads,
                                  Rng& rng, bool trainable = true, int kv_dim = 0) {
        if (kv_dim == 0) kv_dim = dim;
        AttentionParams a;
        a.heads = heads;
        a.qw = ps.add(prefix + ".q.w", init::linear_weight(dim, dim, rng), trainable);
        a.qb = ps.add(prefix + ".q.b", Tensor::zeros({dim}), trainable);
        a.kw = ps.add(prefix + ".k.w", init::linear_weight(dim, kv_dim, rng), trainable);
        a.kb = ps.add(prefix + ".k.b", Tensor::zeros({dim}), trainable);
        a.vw = ps.add(prefix + ".v.w", init::linear_weight(dim, kv_dim, rng), trainable);
        a.vb = ps.add(prefix + ".v.b", Tensor::zeros({dim}), trainable);
        a.pw = ps.add(prefix + ".proj.w", init::linear_weight(dim, dim, rng), trainable);
        a.pb = ps.add(prefix + ".proj.b", Tensor::zeros({dim}), trainable);
        return a;
    }
    static AttentionParams load(const ParamStore& ps, const std::string& prefix, int heads) {
        AttentionParams a;
        a.heads = heads;
        a.qw = ps.get(prefix + ".q.w");
        a.qb = ps.get(prefix + ".q.b");
        a.kw = ps.get(prefix + ".k.w");
        a.kb = ps.get(prefix + ".k.b");
        a.vw = ps.get(prefix + ".v.w");
        a.vb = ps.get(prefix + ".v.b");
        a.pw = ps.get(prefix + ".proj.w");
        a.pb = ps.get(prefix + ".proj.b");
        return a;
    }

    // self-attention when kv == query tokens; cross-attention otherwise
    Var operator()(Var tokens, Var kv_tokens) const {
        const auto& s = tokens.val().shape;  // [B,T,D]
        const auto& sk = kv_tokens.val().shape;
        int B = s[0], T = s[1], D = s[2], S = sk[1];
        int dh = D / heads;
        Var q = reshape(linear(reshape(tokens, {B * T, D}), qw, qb), {B, T, D});
        Var k = reshape(linear(reshape(kv_tokens, {B * S, sk[2]}), kw, kb), {B, S, D});
        Var v = reshape(linear(reshape(kv_tokens, {B * S, sk[2]}), vw, vb), {B, S, D});
        Var qh = split_heads(q, heads);
        Var kh = split_heads(k, heads);
        Var vh = split_heads(v, heads);
        Var scores = mul_scalar(bmm(qh, kh, true), 1.0f / std::sqrt(static_cast<float>(dh)));
        Var ctx = bmm(softmax_lastdim(scores), vh);
        Var merged = merge_heads(ctx, heads);
        return reshape(linear(reshape(merged, {B * T, D}), pw, pb), {B, T, D});
    }
    Var operator()(Var tokens) const { return (*this)(tokens, tokens); }
};

}  // namespace sagiri
